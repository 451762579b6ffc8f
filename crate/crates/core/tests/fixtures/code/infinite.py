class Solution(object):
    def sumTo(self, n):
        while True:
            n += 1
